//! Stage implementations shared by the individual subcommands and `run`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use embalance::balance::{build_sets, neighbor_table, select_representatives, BalanceResult, Partition};
use embalance::cluster::{self, ClusterModel, ModelFile, PROVENANCE_KMEANS};
use embalance::distill::{
    overall_loss, sample_negatives, DistillBatch, LossParams, LossReport, Matrix, Prototypes,
};
use embalance::{validate, EmbeddingSet};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};
use crate::io::{load_embeddings, read_index_list, write_index_list};

/// Per-stage seed: the first eight bytes (little-endian) of
/// `SHA-256("<seed>:<stage>")`.
pub fn stage_seed(seed: u64, stage: &str) -> u64 {
    let digest = Sha256::digest(format!("{seed}:{stage}").as_bytes());
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

pub fn default_chunks() -> usize {
    rayon::current_num_threads().max(1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DedupReport {
    pub n: usize,
    pub kept: usize,
    pub removed_fraction: f64,
    pub beta: f64,
    pub k: usize,
    pub set_size_histogram: BTreeMap<usize, usize>,
}

impl From<&BalanceResult> for DedupReport {
    fn from(r: &BalanceResult) -> Self {
        Self {
            n: r.n,
            kept: r.kept.len(),
            removed_fraction: r.removed_fraction,
            beta: r.beta,
            k: r.k,
            set_size_histogram: r.set_sizes.clone(),
        }
    }
}

pub struct DedupOutcome {
    pub result: BalanceResult,
    pub partition: Partition,
}

pub fn dedup(set: &EmbeddingSet, beta: f64, topk: usize, chunks: usize) -> CliResult<DedupOutcome> {
    let table = neighbor_table(set, topk, chunks)?;
    let partition = build_sets(&table, beta)?;
    let result = select_representatives(&partition, set)?.into_result(beta, topk);
    Ok(DedupOutcome { result, partition })
}

pub fn write_dedup_outputs(
    outcome: &DedupOutcome,
    keep: &Path,
    sets: Option<&Path>,
) -> CliResult<()> {
    write_index_list(keep, &outcome.result.kept)?;
    if let Some(p) = sets {
        write_index_list(p, &outcome.partition.canonical_labels())?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub n: usize,
    pub k: usize,
    pub seed: u64,
    pub objective: f64,
    pub iterations_run: usize,
    pub converged: bool,
    pub objective_trace: Vec<f64>,
    pub cluster_size_histogram: BTreeMap<usize, usize>,
}

impl ClusterReport {
    pub fn new(model: &ClusterModel, seed: u64) -> Self {
        Self {
            n: model.labels.len(),
            k: model.k(),
            seed,
            objective: model.objective,
            iterations_run: model.iterations_run,
            converged: model.converged,
            objective_trace: std::iter::once(model.initial_objective)
                .chain(model.trace.iter().map(|t| t.objective))
                .collect(),
            cluster_size_histogram: model.size_histogram(),
        }
    }
}

pub fn cluster(
    set: &EmbeddingSet,
    k: usize,
    iters: usize,
    tol: f64,
    seed: u64,
    out_model: &Path,
) -> CliResult<ClusterReport> {
    let model = cluster::kmeans(set, k, iters, tol, seed)?;
    cluster::write_model(
        &ModelFile {
            centroids: model.centroids.clone(),
            labels: model.labels.clone(),
            provenance: Some(PROVENANCE_KMEANS.into()),
        },
        out_model,
    )?;
    Ok(ClusterReport::new(&model, seed))
}

#[derive(Debug, Clone)]
pub struct LossInputs {
    /// student image, student text, teacher image, teacher text
    pub batch: [PathBuf; 4],
    pub labels: Option<PathBuf>,
    pub prototypes: PathBuf,
    pub allow_unverified_prototypes: bool,
    pub normalize: bool,
    pub params: LossParams,
    pub neg_rate: f64,
    pub seed: u64,
    pub grad_check: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheck {
    pub epsilon: f64,
    pub tolerance: f64,
    pub student_image_rel_err: f64,
    pub student_text_rel_err: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossCommandReport {
    #[serde(flatten)]
    pub report: LossReport,
    pub k: usize,
    pub active_classes: usize,
    pub neg_rate: f64,
    pub seed: u64,
    /// `file` or `assigned` (teacher image rows to nearest prototype).
    pub labels_source: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grad_check: Option<GradCheck>,
}

pub const GRAD_CHECK_EPSILON: f64 = 1e-4;
pub const GRAD_CHECK_TOLERANCE: f64 = 1e-5;

pub fn loss(inputs: &LossInputs) -> CliResult<LossCommandReport> {
    inputs.params.validate()?;
    let sets: Vec<EmbeddingSet> = inputs
        .batch
        .iter()
        .map(|p| load_embeddings(p, inputs.normalize))
        .collect::<CliResult<_>>()?;
    let model = cluster::read_model(&inputs.prototypes)?;
    let protos = Prototypes::from_model(&model, inputs.allow_unverified_prototypes)?;

    let (labels, labels_source) = match &inputs.labels {
        Some(p) => (read_index_list(p)?, "file"),
        None => (cluster::assign(&sets[2], &model.centroids)?.0, "assigned"),
    };
    if let Some(&bad) = labels.iter().find(|&&l| l >= protos.k()) {
        return Err(CliError::Validation(format!(
            "label {bad} outside [0, {})",
            protos.k()
        )));
    }

    let mut positives = labels.clone();
    positives.sort_unstable();
    positives.dedup();
    let active = sample_negatives(protos.k(), inputs.neg_rate, &positives, inputs.seed)?;
    let active_classes = active.len();
    let protos = protos.with_active(active)?;

    let m = |s: &EmbeddingSet| Matrix::from_embeddings(s);
    let batch = DistillBatch::new(m(&sets[0]), m(&sets[1]), m(&sets[2]), m(&sets[3]), labels)?;
    let report = overall_loss(&batch, &protos, &inputs.params, inputs.grad_check)?;
    let grad_check = match &report.grads {
        Some(g) => Some(finite_difference_check(&batch, &protos, &inputs.params, g)?),
        None => None,
    };

    Ok(LossCommandReport {
        report,
        k: protos.k(),
        active_classes,
        neg_rate: inputs.neg_rate,
        seed: inputs.seed,
        labels_source: labels_source.into(),
        grad_check,
    })
}

/// Central differences of the overall loss with respect to both student
/// towers, compared against the analytic gradients by relative Frobenius error.
fn finite_difference_check(
    batch: &DistillBatch,
    protos: &Prototypes,
    params: &LossParams,
    grads: &embalance::distill::Gradients,
) -> CliResult<GradCheck> {
    let numeric = |pick: fn(&mut DistillBatch) -> &mut Matrix| -> CliResult<Matrix> {
        let mut work = batch.clone();
        let len = pick(&mut work).as_slice().len();
        let cols = pick(&mut work).cols();
        let mut out = vec![0f64; len];
        for (idx, slot) in out.iter_mut().enumerate() {
            let orig = pick(&mut work).as_slice()[idx];
            pick(&mut work).as_mut_slice()[idx] = orig + GRAD_CHECK_EPSILON;
            let plus = overall_loss(&work, protos, params, false)?.sum.l_overall;
            pick(&mut work).as_mut_slice()[idx] = orig - GRAD_CHECK_EPSILON;
            let minus = overall_loss(&work, protos, params, false)?.sum.l_overall;
            pick(&mut work).as_mut_slice()[idx] = orig;
            *slot = (plus - minus) / (2.0 * GRAD_CHECK_EPSILON);
        }
        Ok(Matrix::new(len / cols.max(1), cols, out)?)
    };
    let rel = |a: &Matrix, b: &Matrix| {
        let mut diff = a.clone();
        diff.add_scaled(b, -1.0);
        diff.frobenius_norm() / a.frobenius_norm().max(b.frobenius_norm()).max(1e-300)
    };
    let image = rel(&grads.student_image, &numeric(|b| &mut b.student_image)?);
    let text = rel(&grads.student_text, &numeric(|b| &mut b.student_text)?);
    Ok(GradCheck {
        epsilon: GRAD_CHECK_EPSILON,
        tolerance: GRAD_CHECK_TOLERANCE,
        student_image_rel_err: image,
        student_text_rel_err: text,
        passed: image <= GRAD_CHECK_TOLERANCE && text <= GRAD_CHECK_TOLERANCE,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub n: usize,
    pub dim: usize,
    /// `sets`, `model`, or `singletons`
    pub grouping: String,
    pub groups: usize,
    pub histogram: BTreeMap<usize, usize>,
    pub validation: embalance::embedding::ValidationReport,
}

pub enum Grouping<'a> {
    Singletons,
    Sets(&'a Path),
    Model(&'a Path),
}

pub fn stats(input: &Path, grouping: Grouping<'_>) -> CliResult<StatsReport> {
    let set = embalance::read_embeddings(input)?;
    let n = set.len();
    let check_len = |len: usize, what: &Path| {
        if len != n {
            Err(CliError::Validation(format!(
                "{} describes {len} items, {} has {n}",
                what.display(),
                input.display()
            )))
        } else {
            Ok(())
        }
    };
    let (name, histogram) = match grouping {
        Grouping::Singletons => ("singletons", Partition::new(n).size_histogram()),
        Grouping::Sets(p) => {
            let labels = read_index_list(p)?;
            check_len(labels.len(), p)?;
            ("sets", Partition::from_labels(&labels).size_histogram())
        }
        Grouping::Model(p) => {
            let model = cluster::read_model(p)?;
            check_len(model.labels.len(), p)?;
            let mut hist = BTreeMap::new();
            for s in cluster::cluster_sizes(&model.labels, model.centroids.k()) {
                *hist.entry(s).or_insert(0) += 1;
            }
            ("model", hist)
        }
    };
    Ok(StatsReport {
        n,
        dim: set.dim(),
        grouping: name.into(),
        groups: histogram.values().sum(),
        histogram,
        validation: validate(&set),
    })
}

pub fn write_histogram_csv(path: &Path, histogram: &BTreeMap<usize, usize>) -> CliResult<()> {
    let mut text = String::from("size,count\n");
    for (s, c) in histogram {
        text.push_str(&format!("{s},{c}\n"));
    }
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}
