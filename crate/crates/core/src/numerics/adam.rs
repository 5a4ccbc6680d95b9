// SPDX-License-Identifier: MIT OR Apache-2.0

//! Adam optimizer with bias correction.

use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use crate::error::{Error, Result};

/// Moment accumulators for one parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub first_moment: Matrix,
    pub second_moment: Matrix,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    /// Fresh state shaped like `param` with the usual defaults
    /// (β1 = 0.9, β2 = 0.999, ε = 1e-8).
    pub fn for_param(param: &Matrix) -> Self {
        Self::with_betas(param, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(param: &Matrix, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            step: 0,
            first_moment: Matrix::zeros(param.rows(), param.cols()),
            second_moment: Matrix::zeros(param.rows(), param.cols()),
            beta1,
            beta2,
            eps,
        }
    }
}

/// One Adam update of `params` in place.
pub fn adam_step(params: &mut Matrix, grads: &Matrix, state: &mut AdamState, lr: f64) -> Result<()> {
    if params.shape() != grads.shape() || params.shape() != state.first_moment.shape() {
        return Err(Error::shape(
            "adam_step",
            format!(
                "params {:?}, grads {:?}, state {:?}",
                params.shape(),
                grads.shape(),
                state.first_moment.shape()
            ),
        ));
    }
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::invalid(format!("learning rate must be positive, got {lr}")));
    }
    if let Some(index) = grads.first_non_finite() {
        return Err(Error::NonFinite {
            what: "gradient",
            index,
        });
    }
    state.step += 1;
    let t = state.step as f64;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powf(t);
    let c2 = 1.0 - b2.powf(t);
    let m = state.first_moment.data_mut();
    let v = state.second_moment.data_mut();
    for (((p, &g), mi), vi) in params.data_mut().iter_mut().zip(grads.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
        *mi = b1 * *mi + (1.0 - b1) * g;
        *vi = b2 * *vi + (1.0 - b2) * g * g;
        let m_hat = *mi / c1;
        let v_hat = *vi / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(x: f64) -> Matrix {
        Matrix::from_vec(1, 1, vec![x]).unwrap()
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = Matrix::from_vec(1, 3, vec![1.0, -2.0, 3.0]).unwrap();
        let before = p.clone();
        let mut st = AdamState::for_param(&p);
        adam_step(&mut p, &Matrix::zeros(1, 3), &mut st, 0.1).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn constant_positive_gradient_descends() {
        let mut p = scalar(0.0);
        let mut st = AdamState::for_param(&p);
        let mut prev = p.get(0, 0);
        for _ in 0..50 {
            adam_step(&mut p, &scalar(0.7), &mut st, 0.01).unwrap();
            assert!(p.get(0, 0) < prev);
            prev = p.get(0, 0);
        }
    }

    #[test]
    fn coordinates_are_separable() {
        let mut joint = Matrix::from_vec(1, 2, vec![1.0, -1.0]).unwrap();
        let mut st = AdamState::for_param(&joint);
        let mut a = scalar(1.0);
        let mut sa = AdamState::for_param(&a);
        let mut b = scalar(-1.0);
        let mut sb = AdamState::for_param(&b);
        for k in 0..20 {
            let ga = 0.3 * k as f64 - 1.0;
            let gb = (k as f64).sin();
            adam_step(&mut joint, &Matrix::from_vec(1, 2, vec![ga, gb]).unwrap(), &mut st, 0.05).unwrap();
            adam_step(&mut a, &scalar(ga), &mut sa, 0.05).unwrap();
            adam_step(&mut b, &scalar(gb), &mut sb, 0.05).unwrap();
        }
        assert_eq!(joint.get(0, 0).to_bits(), a.get(0, 0).to_bits());
        assert_eq!(joint.get(0, 1).to_bits(), b.get(0, 0).to_bits());
    }

    #[test]
    fn non_finite_gradient_reports_index() {
        let mut p = Matrix::zeros(1, 3);
        let mut st = AdamState::for_param(&p);
        let mut g = Matrix::zeros(1, 3);
        g.data_mut()[2] = f64::INFINITY;
        let err = adam_step(&mut p, &g, &mut st, 0.1).unwrap_err();
        assert!(matches!(err, Error::NonFinite { index: 2, .. }));
        assert_eq!(st.step, 0);
    }

    #[test]
    fn convex_quadratic_converges() {
        // f(x) = ½ xᵀ A x - bᵀ x with A diagonal positive.
        let a = [1.0, 3.0, 0.5];
        let b = [1.0, -2.0, 0.25];
        let mut x = Matrix::zeros(1, 3);
        let mut st = AdamState::for_param(&x);
        let mut gnorm = f64::INFINITY;
        for _ in 0..10_000 {
            let g: Vec<f64> = (0..3).map(|i| a[i] * x.get(0, i) - b[i]).collect();
            gnorm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            if gnorm < 1e-6 {
                break;
            }
            adam_step(&mut x, &Matrix::from_vec(1, 3, g).unwrap(), &mut st, 1e-2).unwrap();
        }
        assert!(gnorm < 1e-6, "gradient norm {gnorm}");
    }
}
