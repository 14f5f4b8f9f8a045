//! `run`: load -> dedup -> cluster the kept subset -> (optional) losses.
//!
//! Artifacts written under the output directory:
//!
//! | file | content |
//! |------|---------|
//! | `config.txt` | effective configuration |
//! | `kept.txt`, `sets.txt` | kept indices; canonical set label per item |
//! | `kept.emb` | the kept rows (ids carried in the sidecar) |
//! | `dedup.json`, `cluster.json`, `loss.json` | per-stage reports |
//! | `model.kmc` | centroids and labels of the kept subset |
//! | `report.json` | the run report (also printed to stdout) |

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use embalance::distill::{LossComponents, LossParams};
use serde::{Deserialize, Serialize};

use crate::commands::{self, stage_seed, LossInputs};
use crate::config::PipelineConfig;
use crate::error::{CliError, CliResult};
use crate::io::{load_embeddings, to_json, DirLock};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSeeds {
    pub cluster: u64,
    pub loss: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub tool_version: String,
    pub complete: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub failed_stage: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub config: PipelineConfig,
    pub stage_seeds: StageSeeds,
    pub input_count: Option<usize>,
    pub kept_count: Option<usize>,
    pub removed_fraction: Option<f64>,
    pub cluster_objective: Option<f64>,
    pub cluster_iterations: Option<usize>,
    pub loss: Option<LossComponents>,
    pub loss_mean: Option<LossComponents>,
    pub outputs: Vec<String>,
    /// Wall-clock seconds per stage. The only non-deterministic field.
    pub timings: BTreeMap<String, f64>,
}

impl RunReport {
    fn new(config: &PipelineConfig) -> Self {
        Self {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            complete: false,
            failed_stage: None,
            error: None,
            config: config.clone(),
            stage_seeds: StageSeeds {
                cluster: stage_seed(config.seed, "cluster"),
                loss: stage_seed(config.seed, "loss"),
            },
            input_count: None,
            kept_count: None,
            removed_fraction: None,
            cluster_objective: None,
            cluster_iterations: None,
            loss: None,
            loss_mean: None,
            outputs: Vec::new(),
            timings: BTreeMap::new(),
        }
    }
}

struct Run<'a> {
    dir: &'a Path,
    report: RunReport,
}

impl Run<'_> {
    fn stage<T>(
        &mut self,
        name: &'static str,
        f: impl FnOnce(&Path, &mut RunReport) -> CliResult<T>,
    ) -> CliResult<T> {
        let start = Instant::now();
        let out = f(self.dir, &mut self.report);
        self.report
            .timings
            .insert(name.to_string(), start.elapsed().as_secs_f64());
        out.map_err(|e| {
            self.report.failed_stage = Some(name.into());
            self.report.error = Some(e.to_string());
            CliError::Stage {
                stage: name,
                source: Box::new(e),
            }
        })
    }

    fn output(&mut self, name: &str) -> PathBuf {
        self.report.outputs.push(name.to_string());
        self.dir.join(name)
    }
}

fn write(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// Runs every configured stage. The report is written to
/// `<out-dir>/report.json` whether or not a stage fails; on failure it
/// carries `complete: false` and the failing stage.
pub fn run_pipeline(config: &PipelineConfig) -> CliResult<RunReport> {
    config.validate()?;
    let input = config
        .input
        .clone()
        .ok_or_else(|| CliError::Config("`input` is required".into()))?;
    let dir = config
        .out_dir
        .clone()
        .ok_or_else(|| CliError::Config("`out-dir` is required".into()))?;
    let _lock = DirLock::acquire(&dir)?;

    let mut run = Run {
        dir: &dir,
        report: RunReport::new(config),
    };
    let result = execute(&mut run, config, &input);
    run.report.complete = result.is_ok();
    write(&dir.join("report.json"), &to_json(&run.report))?;
    result.map(|()| run.report)
}

fn execute(run: &mut Run<'_>, config: &PipelineConfig, input: &Path) -> CliResult<()> {
    let config_path = run.output("config.txt");
    write(&config_path, &config.to_text())?;

    let set = run.stage("load", |_, report| {
        let set = load_embeddings(input, config.normalize)?;
        report.input_count = Some(set.len());
        Ok(set)
    })?;

    let (keep_path, sets_path, dedup_json, kept_emb) = (
        run.output("kept.txt"),
        run.output("sets.txt"),
        run.output("dedup.json"),
        run.output("kept.emb"),
    );
    let kept = run.stage("dedup", |_, report| {
        let chunks = config.chunks.unwrap_or_else(commands::default_chunks);
        let outcome = commands::dedup(&set, config.beta, config.topk, chunks)?;
        commands::write_dedup_outputs(&outcome, &keep_path, Some(&sets_path))?;
        write(&dedup_json, &to_json(&commands::DedupReport::from(&outcome.result)))?;
        let kept = set.subset(&outcome.result.kept)?;
        embalance::write_embeddings(&kept, &kept_emb)?;
        report.kept_count = Some(kept.len());
        report.removed_fraction = Some(outcome.result.removed_fraction);
        Ok(kept)
    })?;

    let (model_path, cluster_json) = (run.output("model.kmc"), run.output("cluster.json"));
    let cluster_seed = run.report.stage_seeds.cluster;
    run.stage("cluster", |_, report| {
        let r = commands::cluster(&kept, config.k, config.iters, config.tol, cluster_seed, &model_path)?;
        write(&cluster_json, &to_json(&r))?;
        report.cluster_objective = Some(r.objective);
        report.cluster_iterations = Some(r.iterations_run);
        Ok(())
    })?;

    if let Some(batch) = &config.batch {
        let loss_json = run.output("loss.json");
        let inputs = LossInputs {
            batch: batch.clone(),
            labels: config.labels.clone(),
            prototypes: model_path.clone(),
            allow_unverified_prototypes: false,
            normalize: config.normalize,
            params: LossParams {
                tau: config.tau,
                alpha: config.alpha,
                gamma: config.gamma,
            },
            neg_rate: config.neg_rate,
            seed: run.report.stage_seeds.loss,
            grad_check: false,
        };
        run.stage("loss", |_, report| {
            let r = commands::loss(&inputs)?;
            write(&loss_json, &to_json(&r))?;
            report.loss = Some(r.report.sum.clone());
            report.loss_mean = Some(r.report.mean.clone());
            Ok(())
        })?;
    }
    Ok(())
}
