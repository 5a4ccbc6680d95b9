// SPDX-License-Identifier: MIT OR Apache-2.0

//! Principal components via eigendecomposition of the sample covariance.

use nalgebra::{DMatrix, SymmetricEigen};

use super::matrix::Matrix;
use crate::error::{Error, Result};

/// Output of [`pca`].
#[derive(Debug, Clone)]
pub struct Pca {
    /// `d × P`, orthonormal columns.
    pub components: Matrix,
    /// `n × P`, centered data projected on the components.
    pub scores: Matrix,
    /// Eigenvalues of the covariance (denominator `n - 1`), non-increasing.
    pub explained_variance: Vec<f64>,
    /// Column means removed before projection.
    pub means: Vec<f64>,
}

/// Centers `data` column-wise and projects it onto its top
/// `num_components` principal axes.
///
/// Each component is signed so that its largest-magnitude entry is positive
/// (first such entry on exact ties), which makes the output reproducible.
pub fn pca(data: &Matrix, num_components: usize) -> Result<Pca> {
    let (n, d) = data.shape();
    if n < 2 {
        return Err(Error::invalid(format!("pca needs at least 2 rows, got {n}")));
    }
    if num_components > n.min(d) {
        return Err(Error::invalid(format!(
            "pca: {num_components} components requested from a {n}x{d} matrix"
        )));
    }
    let means = data.column_means();
    let mut centered = data.clone();
    for r in 0..n {
        for (v, m) in centered.row_mut(r).iter_mut().zip(&means) {
            *v -= m;
        }
    }

    let mut cov = vec![0.0; d * d];
    super::matrix::gemm_at_b(centered.data(), centered.data(), &mut cov, n, d, d);
    let denom = (n - 1) as f64;
    cov.iter_mut().for_each(|v| *v /= denom);
    // Exact symmetry before handing to the solver.
    for i in 0..d {
        for j in 0..i {
            let avg = 0.5 * (cov[i * d + j] + cov[j * d + i]);
            cov[i * d + j] = avg;
            cov[j * d + i] = avg;
        }
    }

    let eig = SymmetricEigen::new(DMatrix::from_row_slice(d, d, &cov));
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });

    let mut components = Matrix::zeros(d, num_components);
    let mut explained_variance = Vec::with_capacity(num_components);
    for (p, &idx) in order.iter().take(num_components).enumerate() {
        let col = eig.eigenvectors.column(idx);
        let mut best = 0usize;
        for i in 1..d {
            if col[i].abs() > col[best].abs() + 1e-12 {
                best = i;
            }
        }
        let sign = if col[best] < 0.0 { -1.0 } else { 1.0 };
        let norm = col.norm();
        for i in 0..d {
            components.set(i, p, sign * col[i] / norm);
        }
        explained_variance.push(eig.eigenvalues[idx].max(0.0));
    }

    let scores = centered.matmul(&components)?;
    Ok(Pca {
        components,
        scores,
        explained_variance,
        means,
    })
}
