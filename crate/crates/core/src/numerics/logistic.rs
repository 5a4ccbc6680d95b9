// SPDX-License-Identifier: MIT OR Apache-2.0

//! Ridge-regularized binary logistic regression fitted by full-batch Adam,
//! plus a column standardizer shared by the feature ranking and the
//! rolling predictor.

use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamState};
use super::matrix::{dot, Matrix};
use crate::error::{Error, Result};

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LogisticOptions {
    /// L2 penalty on the weights (the intercept is not penalized).
    pub ridge: f64,
    pub learning_rate: f64,
    pub max_iter: usize,
    /// Stop once the full gradient norm drops below this.
    pub tol: f64,
    /// Early-stopping patience in iterations, used only when a validation
    /// set is supplied.
    pub patience: usize,
}

impl Default for LogisticOptions {
    fn default() -> Self {
        Self {
            ridge: 1e-4,
            learning_rate: 0.05,
            max_iter: 400,
            tol: 1e-6,
            patience: 40,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    pub weights: Vec<f64>,
    pub intercept: f64,
}

impl LogisticModel {
    pub fn zeros(d: usize) -> Self {
        Self {
            weights: vec![0.0; d],
            intercept: 0.0,
        }
    }

    pub fn decision(&self, x: &[f64]) -> f64 {
        dot(&self.weights, x) + self.intercept
    }

    pub fn probability(&self, x: &[f64]) -> f64 {
        sigmoid(self.decision(x))
    }
}

#[derive(Debug, Clone)]
pub struct LogisticFit {
    pub model: LogisticModel,
    pub iterations: usize,
    pub grad_norm: f64,
    pub converged: bool,
    /// Iteration whose parameters were kept (differs from `iterations`
    /// under early stopping).
    pub best_iteration: usize,
}

/// Mean negative log-likelihood of `model` on `(x, y)`.
pub fn log_loss(model: &LogisticModel, x: &Matrix, y: &[bool]) -> f64 {
    let n = x.rows().max(1) as f64;
    (0..x.rows())
        .map(|r| {
            let z = model.decision(x.row(r));
            // log(1 + e^z) - y z, computed stably.
            let softplus = if z > 0.0 { z + (-z).exp().ln_1p() } else { z.exp().ln_1p() };
            softplus - if y[r] { z } else { 0.0 }
        })
        .sum::<f64>()
        / n
}

fn gradient(model: &LogisticModel, x: &Matrix, y: &[bool], ridge: f64) -> (Vec<f64>, f64) {
    let (n, d) = x.shape();
    let mut gw = vec![0.0; d];
    let mut gb = 0.0;
    for (r, &yr) in y.iter().enumerate().take(n) {
        let row = x.row(r);
        let resid = sigmoid(model.decision(row)) - if yr { 1.0 } else { 0.0 };
        gb += resid;
        for (g, v) in gw.iter_mut().zip(row) {
            *g += resid * v;
        }
    }
    let inv = 1.0 / n as f64;
    for (g, w) in gw.iter_mut().zip(&model.weights) {
        *g = *g * inv + ridge * w;
    }
    (gw, gb * inv)
}

fn check(x: &Matrix, y: &[bool]) -> Result<()> {
    if x.rows() != y.len() {
        return Err(Error::shape(
            "fit_logistic",
            format!("{} rows but {} labels", x.rows(), y.len()),
        ));
    }
    if x.rows() == 0 {
        return Err(Error::invalid("fit_logistic: empty design matrix"));
    }
    Ok(())
}

/// Maximum-likelihood fit with ridge penalty. Returns the last iterate when
/// the tolerance is not reached (`converged == false`).
pub fn fit_logistic(x: &Matrix, y: &[bool], opts: &LogisticOptions) -> Result<LogisticFit> {
    fit_inner(x, y, None, opts)
}

/// Same as [`fit_logistic`] but keeps the parameters with the lowest
/// validation log-loss and stops after `opts.patience` iterations without
/// improvement.
pub fn fit_logistic_early_stopping(
    x: &Matrix,
    y: &[bool],
    x_val: &Matrix,
    y_val: &[bool],
    opts: &LogisticOptions,
) -> Result<LogisticFit> {
    check(x_val, y_val)?;
    if x_val.cols() != x.cols() {
        return Err(Error::shape(
            "fit_logistic_early_stopping",
            format!("train has {} columns, validation {}", x.cols(), x_val.cols()),
        ));
    }
    fit_inner(x, y, Some((x_val, y_val)), opts)
}

fn fit_inner(
    x: &Matrix,
    y: &[bool],
    val: Option<(&Matrix, &[bool])>,
    opts: &LogisticOptions,
) -> Result<LogisticFit> {
    check(x, y)?;
    let d = x.cols();
    let mut model = LogisticModel::zeros(d);
    let mut w = Matrix::zeros(1, d);
    let mut b = Matrix::zeros(1, 1);
    let mut sw = AdamState::for_param(&w);
    let mut sb = AdamState::for_param(&b);

    let mut best = (f64::INFINITY, model.clone(), 0usize);
    let mut grad_norm = f64::INFINITY;
    let mut iterations = 0;
    let mut converged = false;
    for it in 0..opts.max_iter {
        // The untrained model is not a candidate.
        if let (Some((xv, yv)), true) = (val, it > 0) {
            let vl = log_loss(&model, xv, yv);
            if vl < best.0 {
                best = (vl, model.clone(), it);
            } else if it - best.2 >= opts.patience {
                break;
            }
        }
        let (gw, gb) = gradient(&model, x, y, opts.ridge);
        grad_norm = (gw.iter().map(|g| g * g).sum::<f64>() + gb * gb).sqrt();
        if grad_norm < opts.tol {
            converged = true;
            break;
        }
        adam_step(&mut w, &Matrix::from_vec(1, d, gw)?, &mut sw, opts.learning_rate)?;
        adam_step(&mut b, &Matrix::from_vec(1, 1, vec![gb])?, &mut sb, opts.learning_rate)?;
        model.weights.copy_from_slice(w.data());
        model.intercept = b.get(0, 0);
        iterations = it + 1;
    }

    if let Some((xv, yv)) = val {
        let vl = log_loss(&model, xv, yv);
        if vl < best.0 {
            best = (vl, model.clone(), iterations);
        }
        return Ok(LogisticFit {
            model: best.1,
            iterations,
            grad_norm,
            converged,
            best_iteration: best.2,
        });
    }
    Ok(LogisticFit {
        model,
        iterations,
        grad_norm,
        converged,
        best_iteration: iterations,
    })
}

/// Per-column z-scoring fitted on one sample and applied to others.
/// Columns that are constant on the fitting sample are dropped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub kept: Vec<usize>,
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: &Matrix) -> Self {
        let (n, d) = x.shape();
        let means = x.column_means();
        let mut vars = vec![0.0; d];
        for r in 0..n {
            for ((v, m), s) in x.row(r).iter().zip(&means).zip(vars.iter_mut()) {
                *s += (v - m) * (v - m);
            }
        }
        let mut kept = Vec::new();
        let mut km = Vec::new();
        let mut ks = Vec::new();
        for c in 0..d {
            let sd = (vars[c] / n.max(1) as f64).sqrt();
            if sd > 1e-12 {
                kept.push(c);
                km.push(means[c]);
                ks.push(sd);
            }
        }
        Self {
            kept,
            means: km,
            stds: ks,
        }
    }

    pub fn transform(&self, x: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(x.rows(), self.kept.len());
        for r in 0..x.rows() {
            let src = x.row(r);
            for (j, ((&c, m), s)) in self.kept.iter().zip(&self.means).zip(&self.stds).enumerate() {
                out.set(r, j, (src[c] - m) / s);
            }
        }
        out
    }

    pub fn transform_row(&self, row: &[f64]) -> Vec<f64> {
        self.kept
            .iter()
            .zip(&self.means)
            .zip(&self.stds)
            .map(|((&c, m), s)| (row[c] - m) / s)
            .collect()
    }
}
