//! Bidirectional contrastive loss over a batch of paired rows.

use super::matrix::{axpy, dot, Matrix};
use super::softmax::{check_tau, log_sum_exp};
use crate::error::{Error, Result};

/// Value and gradients of [`contrastive_loss`].
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveValue {
    pub value: f64,
    pub grad_left: Matrix,
    pub grad_right: Matrix,
}

/// `0.5 * (L_{l->r} + L_{r->l})` where, with `S_ij = l_i . r_j / tau`,
/// `L_{l->r} = sum_i [logsumexp_j S_ij - S_ii]` and
/// `L_{r->l} = sum_i [logsumexp_j S_ji - S_ii]`. Diagonal pairs are positives.
///
/// Swapping the arguments gives a bit-identical value.
pub fn contrastive_loss(left: &Matrix, right: &Matrix, tau: f64) -> Result<ContrastiveValue> {
    check_tau(tau)?;
    let n = left.rows();
    if n == 0 {
        return Err(Error::InvalidParameter("contrastive loss needs n >= 1".into()));
    }
    if (right.rows(), right.cols()) != (n, left.cols()) {
        return Err(Error::Shape(format!(
            "left is {}x{}, right is {}x{}",
            n,
            left.cols(),
            right.rows(),
            right.cols()
        )));
    }

    let mut sim = vec![0f64; n * n];
    for i in 0..n {
        for j in 0..n {
            sim[i * n + j] = dot(left.row(i), right.row(j)) / tau;
        }
    }
    let row_lse: Vec<f64> = (0..n)
        .map(|i| log_sum_exp((0..n).map(|j| sim[i * n + j])))
        .collect();
    let col_lse: Vec<f64> = (0..n)
        .map(|j| log_sum_exp((0..n).map(|i| sim[i * n + j])))
        .collect();

    let left_to_right: f64 = (0..n).map(|i| row_lse[i] - sim[i * n + i]).sum();
    let right_to_left: f64 = (0..n).map(|i| col_lse[i] - sim[i * n + i]).sum();
    let value = 0.5 * (left_to_right + right_to_left);

    // dL/dS_ij = 0.5 * (P_ij + Q_ij) - [i == j], P row-softmax, Q column-softmax
    let mut grad_left = Matrix::zeros(n, left.cols());
    let mut grad_right = Matrix::zeros(n, left.cols());
    for i in 0..n {
        for j in 0..n {
            let s = sim[i * n + j];
            let p = (s - row_lse[i]).exp();
            let q = (s - col_lse[j]).exp();
            let g = (0.5 * (p + q) - if i == j { 1.0 } else { 0.0 }) / tau;
            axpy(grad_left.row_mut(i), g, right.row(j));
            axpy(grad_right.row_mut(j), g, left.row(i));
        }
    }

    Ok(ContrastiveValue {
        value,
        grad_left,
        grad_right,
    })
}
