//! Distillation losses with analytic gradients with respect to the student
//! embeddings. Teacher embeddings and prototypes are constants.
//!
//! All batch losses are sums over rows; [`LossReport::mean`] carries the
//! per-row averages. Arithmetic runs in f64 regardless of storage precision.
//!
//! | loss | definition |
//! |------|------------|
//! | logit | `-sum_i log softmax(W^T e_i)[z_i]` |
//! | kl | `sum_i KL(softmax(W^T e_i^s / tau) \|\| softmax(W^T e_i^t / tau))` |
//! | cluster | `alpha * logit + (1 - alpha) * kl` |
//! | contrast(e, c) | `0.5 * (L_{e->c} + L_{c->e})` |
//! | instance | `gamma * contrast(e^s, c^t) + (1 - gamma) * contrast(c^s, e^t)` |
//! | overall | `contrast(e^s, c^s) + cluster + instance` |

mod cluster_loss;
mod contrastive;
mod matrix;
mod sampling;
mod softmax;

use serde::{Deserialize, Serialize};

use crate::cluster::{Centroids, ModelFile, PROVENANCE_KMEANS};
use crate::error::{Error, Result};

pub use cluster_loss::{kl_distill_loss, logit_loss, weighted_cluster};
pub use contrastive::{contrastive_loss, ContrastiveValue};
pub use matrix::Matrix;
pub use sampling::sample_negatives;
pub use softmax::softmax_with_temperature;

pub const DEFAULT_TAU: f64 = 0.07;
pub const DEFAULT_ALPHA: f64 = 0.999;
pub const DEFAULT_GAMMA: f64 = 0.5;

/// A scalar loss and its gradient with respect to one input block.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grad: Matrix,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParams {
    pub tau: f64,
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for LossParams {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            alpha: DEFAULT_ALPHA,
            gamma: DEFAULT_GAMMA,
        }
    }
}

impl LossParams {
    pub fn validate(&self) -> Result<()> {
        softmax::check_tau(self.tau)?;
        for (name, v) in [("alpha", self.alpha), ("gamma", self.gamma)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidParameter(format!(
                    "{name} must lie in [0, 1], got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Prototype matrix `W` (d x k), stored one column per row, with an
/// optional sorted subset of active columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Prototypes {
    columns: Matrix,
    active: Option<Vec<usize>>,
}

impl Prototypes {
    /// `columns` is k x d: row `j` holds prototype `w_j`.
    pub fn new(columns: Matrix) -> Result<Self> {
        if columns.rows() == 0 || columns.cols() == 0 {
            return Err(Error::Shape("prototype matrix is empty".into()));
        }
        Ok(Self {
            columns,
            active: None,
        })
    }

    pub fn from_centroids(c: &Centroids) -> Result<Self> {
        let data = c.as_slice().iter().map(|&v| v as f64).collect();
        Self::new(Matrix::new(c.k(), c.dim(), data)?)
    }

    /// Prototypes must come from k-means; anything else is refused unless
    /// `allow_other_provenance` is set.
    pub fn from_model(model: &ModelFile, allow_other_provenance: bool) -> Result<Self> {
        if !allow_other_provenance && model.provenance.as_deref() != Some(PROVENANCE_KMEANS) {
            return Err(Error::InvalidParameter(format!(
                "prototypes have provenance {:?}, expected {PROVENANCE_KMEANS:?}",
                model.provenance
            )));
        }
        Self::from_centroids(&model.centroids)
    }

    /// Restricts the softmax to `active` (sorted, unique, within `0..k`).
    pub fn with_active(mut self, active: Vec<usize>) -> Result<Self> {
        if active.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidParameter(
                "active columns must be sorted and unique".into(),
            ));
        }
        if active.last().is_some_and(|&c| c >= self.k()) {
            return Err(Error::InvalidParameter(format!(
                "active column outside [0, {})",
                self.k()
            )));
        }
        if active.is_empty() {
            return Err(Error::InvalidParameter("empty active set".into()));
        }
        self.active = Some(active);
        Ok(self)
    }

    pub fn k(&self) -> usize {
        self.columns.rows()
    }

    pub fn dim(&self) -> usize {
        self.columns.cols()
    }

    #[inline]
    pub fn column(&self, j: usize) -> &[f64] {
        self.columns.row(j)
    }

    pub fn active(&self) -> Option<&[usize]> {
        self.active.as_deref()
    }

    pub(crate) fn active_columns(&self) -> Vec<usize> {
        match &self.active {
            Some(a) => a.clone(),
            None => (0..self.k()).collect(),
        }
    }
}

/// Student and teacher embeddings of one batch plus cluster labels.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillBatch {
    pub student_image: Matrix,
    pub student_text: Matrix,
    pub teacher_image: Matrix,
    pub teacher_text: Matrix,
    pub labels: Vec<usize>,
}

impl DistillBatch {
    pub fn new(
        student_image: Matrix,
        student_text: Matrix,
        teacher_image: Matrix,
        teacher_text: Matrix,
        labels: Vec<usize>,
    ) -> Result<Self> {
        let shape = (student_image.rows(), student_image.cols());
        for (name, m) in [
            ("student_text", &student_text),
            ("teacher_image", &teacher_image),
            ("teacher_text", &teacher_text),
        ] {
            if (m.rows(), m.cols()) != shape {
                return Err(Error::Shape(format!(
                    "{name} is {}x{}, student_image is {}x{}",
                    m.rows(),
                    m.cols(),
                    shape.0,
                    shape.1
                )));
            }
        }
        if labels.len() != shape.0 {
            return Err(Error::Shape(format!(
                "{} labels for {} rows",
                labels.len(),
                shape.0
            )));
        }
        Ok(Self {
            student_image,
            student_text,
            teacher_image,
            teacher_text,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// `gamma * contrast(e^s, c^t) + (1 - gamma) * contrast(c^s, e^t)` with
/// gradients for the student image and text rows.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceValue {
    pub value: f64,
    pub grad_student_image: Matrix,
    pub grad_student_text: Matrix,
}

pub fn instance_loss(batch: &DistillBatch, params: &LossParams) -> Result<InstanceValue> {
    params.validate()?;
    let image = contrastive_loss(&batch.student_image, &batch.teacher_text, params.tau)?;
    let text = contrastive_loss(&batch.student_text, &batch.teacher_image, params.tau)?;
    Ok(InstanceValue {
        value: params.gamma * image.value + (1.0 - params.gamma) * text.value,
        grad_student_image: image.grad_left.scaled(params.gamma),
        grad_student_text: text.grad_left.scaled(1.0 - params.gamma),
    })
}

/// `alpha * logit + (1 - alpha) * kl`, gradient with respect to the student image.
pub fn cluster_loss(batch: &DistillBatch, protos: &Prototypes, params: &LossParams) -> Result<LossValue> {
    params.validate()?;
    let logit = logit_loss(&batch.student_image, &batch.labels, protos)?;
    let kl = kl_distill_loss(&batch.student_image, &batch.teacher_image, protos, params.tau)?;
    let mut grad = logit.grad.scaled(params.alpha);
    grad.add_scaled(&kl.grad, 1.0 - params.alpha);
    Ok(LossValue {
        value: weighted_cluster(logit.value, kl.value, params.alpha),
        grad,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub l_logit: f64,
    pub l_kl: f64,
    pub l_cluster: f64,
    pub l_contrast_base: f64,
    pub l_instance: f64,
    pub l_overall: f64,
}

impl LossComponents {
    /// Assembles the composite terms from the four primitive losses.
    pub fn compose(l_logit: f64, l_kl: f64, l_contrast_base: f64, l_instance: f64, alpha: f64) -> Self {
        let l_cluster = weighted_cluster(l_logit, l_kl, alpha);
        Self {
            l_logit,
            l_kl,
            l_cluster,
            l_contrast_base,
            l_instance,
            l_overall: overall_from_components(l_contrast_base, l_cluster, l_instance),
        }
    }

    fn scaled(&self, s: f64) -> Self {
        Self {
            l_logit: self.l_logit * s,
            l_kl: self.l_kl * s,
            l_cluster: self.l_cluster * s,
            l_contrast_base: self.l_contrast_base * s,
            l_instance: self.l_instance * s,
            l_overall: self.l_overall * s,
        }
    }
}

/// `base + cluster + instance`
#[inline]
pub fn overall_from_components(l_base: f64, l_cluster: f64, l_instance: f64) -> f64 {
    l_base + l_cluster + l_instance
}

/// Gradients of the overall loss with respect to the student towers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub student_image: Matrix,
    pub student_text: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub n: usize,
    /// Summed over the batch.
    #[serde(flatten)]
    pub sum: LossComponents,
    /// `sum / n`.
    pub mean: LossComponents,
    pub params: LossParams,
    #[serde(skip)]
    pub grads: Option<Gradients>,
}

/// Every loss on one batch; gradients are attached when `with_grads` is set.
pub fn overall_loss(
    batch: &DistillBatch,
    protos: &Prototypes,
    params: &LossParams,
    with_grads: bool,
) -> Result<LossReport> {
    params.validate()?;
    let logit = logit_loss(&batch.student_image, &batch.labels, protos)?;
    let kl = kl_distill_loss(&batch.student_image, &batch.teacher_image, protos, params.tau)?;
    let base = contrastive_loss(&batch.student_image, &batch.student_text, params.tau)?;
    let instance = instance_loss(batch, params)?;

    let sum = LossComponents::compose(logit.value, kl.value, base.value, instance.value, params.alpha);
    let n = batch.len();
    let mean = sum.scaled(1.0 / n as f64);

    let grads = with_grads.then(|| {
        let mut image = base.grad_left;
        image.add_scaled(&logit.grad, params.alpha);
        image.add_scaled(&kl.grad, 1.0 - params.alpha);
        image.add_scaled(&instance.grad_student_image, 1.0);
        let mut text = base.grad_right;
        text.add_scaled(&instance.grad_student_text, 1.0);
        Gradients {
            student_image: image,
            student_text: text,
        }
    });

    Ok(LossReport {
        n,
        sum,
        mean,
        params: *params,
        grads,
    })
}
