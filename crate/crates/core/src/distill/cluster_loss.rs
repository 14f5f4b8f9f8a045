//! Cluster-level losses: softmax classification against prototypes and
//! temperature-softened KL alignment between student and teacher.

use super::matrix::{axpy, dot, Matrix};
use super::softmax::{check_tau, log_softmax_in_place};
use super::{LossValue, Prototypes};
use crate::error::{Error, Result};

fn check_rows(student: &Matrix, protos: &Prototypes) -> Result<()> {
    if student.cols() != protos.dim() {
        return Err(Error::Shape(format!(
            "embedding dim {} does not match prototype dim {}",
            student.cols(),
            protos.dim()
        )));
    }
    Ok(())
}

/// Summed softmax cross-entropy of `W^T e_i` against each row's label,
/// over the active prototype columns. No temperature is applied.
///
/// Returns the loss and its gradient with respect to `student_image`.
pub fn logit_loss(
    student_image: &Matrix,
    labels: &[usize],
    protos: &Prototypes,
) -> Result<LossValue> {
    check_rows(student_image, protos)?;
    if labels.len() != student_image.rows() {
        return Err(Error::Shape(format!(
            "{} labels for {} rows",
            labels.len(),
            student_image.rows()
        )));
    }
    let active = protos.active_columns();
    let mut slot_of = vec![usize::MAX; protos.k()];
    for (s, &c) in active.iter().enumerate() {
        slot_of[c] = s;
    }

    let mut grad = Matrix::zeros(student_image.rows(), student_image.cols());
    let mut losses = Vec::with_capacity(labels.len());
    let mut logp = vec![0f64; active.len()];
    for (i, &label) in labels.iter().enumerate() {
        let target = match slot_of.get(label) {
            Some(&s) if s != usize::MAX => s,
            _ => return Err(Error::InactiveLabel { label }),
        };
        let e = student_image.row(i);
        for (lp, &c) in logp.iter_mut().zip(active.iter()) {
            *lp = dot(protos.column(c), e);
        }
        log_softmax_in_place(&mut logp);
        losses.push(-logp[target]);

        let g = grad.row_mut(i);
        for (s, &c) in active.iter().enumerate() {
            let coeff = logp[s].exp() - if s == target { 1.0 } else { 0.0 };
            axpy(g, coeff, protos.column(c));
        }
    }
    Ok(LossValue {
        value: losses.iter().sum(),
        grad,
    })
}

/// Summed `KL(p_student || p_teacher)` with `p = softmax(W^T e / tau)` over
/// the active columns. The teacher distribution is a constant; the gradient
/// is with respect to `student_image` only.
pub fn kl_distill_loss(
    student_image: &Matrix,
    teacher_image: &Matrix,
    protos: &Prototypes,
    tau: f64,
) -> Result<LossValue> {
    check_tau(tau)?;
    check_rows(student_image, protos)?;
    check_rows(teacher_image, protos)?;
    if student_image.rows() != teacher_image.rows() {
        return Err(Error::Shape(format!(
            "{} student rows vs {} teacher rows",
            student_image.rows(),
            teacher_image.rows()
        )));
    }
    let active = protos.active_columns();
    let mut grad = Matrix::zeros(student_image.rows(), student_image.cols());
    let mut losses = Vec::with_capacity(student_image.rows());
    let mut log_ps = vec![0f64; active.len()];
    let mut log_pt = vec![0f64; active.len()];

    for i in 0..student_image.rows() {
        let (es, et) = (student_image.row(i), teacher_image.row(i));
        for (s, &c) in active.iter().enumerate() {
            let w = protos.column(c);
            log_ps[s] = dot(w, es) / tau;
            log_pt[s] = dot(w, et) / tau;
        }
        log_softmax_in_place(&mut log_ps);
        log_softmax_in_place(&mut log_pt);

        let kl: f64 = log_ps
            .iter()
            .zip(&log_pt)
            .map(|(&a, &b)| a.exp() * (a - b))
            .sum();
        losses.push(kl);

        // d KL / d z_j = p_j (log p_j - log q_j - KL), z = W^T e / tau
        let g = grad.row_mut(i);
        for (s, &c) in active.iter().enumerate() {
            let coeff = log_ps[s].exp() * (log_ps[s] - log_pt[s] - kl) / tau;
            axpy(g, coeff, protos.column(c));
        }
    }
    Ok(LossValue {
        value: losses.iter().sum(),
        grad,
    })
}

/// `alpha * logit + (1 - alpha) * kl`
#[inline]
pub fn weighted_cluster(l_logit: f64, l_kl: f64, alpha: f64) -> f64 {
    alpha * l_logit + (1.0 - alpha) * l_kl
}
